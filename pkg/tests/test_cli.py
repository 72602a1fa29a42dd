import json

import pytest

from mercatran import cli, pipeline


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


TINY_MODEL = {"d": 16, "d_ff": 32, "h": 4, "n_blocks": 1, "batch_size": 32, "dropout": 0.0, "warmup_steps": 20}
TINY_GEN = {"n_users": 40, "n_items": 120, "n_brands": 8}


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    gen_cfg = write_json(w / "gen.json", TINY_GEN)
    model_cfg = write_json(w / "model.json", TINY_MODEL)
    ev, it = w / "ev.jsonl", w / "it.jsonl"
    assert cli.main(["gen", "--config", gen_cfg, "--seed", "3", "--out", str(ev), "--items", str(it)]) == 0
    assert cli.main(["prep", "--events", str(ev), "--items", str(it), "--out", str(w / "tr.bin"),
                     "--vocab", str(w / "vocab.json"), "--holdout-fraction", "0.2",
                     "--holdout-out", str(w / "te.bin")]) == 0
    assert cli.main(["train", "--config", model_cfg, "--examples", str(w / "tr.bin"),
                     "--vocab", str(w / "vocab.json"), "--out", str(w / "ckpt"), "--epochs", "2"]) == 0
    return w


class TestStages:
    def test_gen_deterministic(self, staged, tmp_path):
        cfg = write_json(tmp_path / "g.json", TINY_GEN)
        assert cli.main(["--seed", "3", "gen", "--config", cfg, "--out", str(tmp_path / "e"),
                         "--items", str(tmp_path / "i")]) == 0
        assert (tmp_path / "e").read_bytes() == (staged / "ev.jsonl").read_bytes()
        assert (tmp_path / "i").read_bytes() == (staged / "it.jsonl").read_bytes()

    def test_train_outputs(self, staged):
        assert (staged / "ckpt" / "last").exists() and (staged / "ckpt" / "best").exists()

    def test_eval_and_index(self, staged, capsys):
        out = staged / "report.json"
        assert cli.main(["eval", "--ckpt", str(staged / "ckpt"), "--examples", str(staged / "te.bin"),
                         "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert json.loads(capsys.readouterr().out) == rep
        assert len(rep["rows"]) == 12
        assert cli.main(["index", "--ckpt", str(staged / "ckpt"), "--items", str(staged / "it.jsonl"),
                         "--out", str(staged / "x.midx"), "--events", str(staged / "ev.jsonl"),
                         "--store", str(staged / "s.mfst")]) == 0
        assert (staged / "x.midx").exists() and (staged / "x.midx.catalog.json").exists()
        assert (staged / "s.mfst").exists()

    def test_errors_give_nonzero_exit(self, tmp_path, capsys):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "none"), "--examples", str(tmp_path / "x"),
                         "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert json.loads(err)["level"] == "error"
        bad = write_json(tmp_path / "m.json", {"no_such_field": 1})
        assert cli.main(["train", "--config", bad, "--examples", "x", "--vocab", "v", "--out", "o"]) == 1

    def test_parser_global_options(self):
        args = cli.build_parser().parse_args(["--seed", "9", "gen", "--out", "a", "--items", "b"])
        assert args.seed == 9
        args = cli.build_parser().parse_args(["gen", "--seed", "4", "--out", "a", "--items", "b"])
        assert args.seed == 4
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["demo", "huge"])


def tiny_demo(workdir, epochs=2):
    return pipeline.PipelineConfig(workdir=str(workdir), seed=1, gen=TINY_GEN, model=TINY_MODEL, epochs=epochs, k=5)


class TestDemo:
    def test_demo_runs_and_is_deterministic(self, tmp_path):
        a = pipeline.run_demo(tiny_demo(tmp_path / "a"))
        b = pipeline.run_demo(tiny_demo(tmp_path / "b"))
        ra, rb = (tmp_path / "a" / "report.json").read_bytes(), (tmp_path / "b" / "report.json").read_bytes()
        assert ra == rb
        assert a["manifest"]["artifacts"]["report"] == b["manifest"]["artifacts"]["report"]
        req = json.loads((tmp_path / "a" / "request.json").read_text())
        assert req["cache_hit"] and len(req["steps"]) == 4

    def test_resume_after_train(self, tmp_path):
        full = pipeline.run_demo(tiny_demo(tmp_path / "full", epochs=3))
        # an interrupted run that stopped after epoch 2, then restarted with the full budget
        pipeline.run_demo(tiny_demo(tmp_path / "part", epochs=2))
        (tmp_path / "part" / "report.json").unlink()
        resumed = pipeline.run_demo(tiny_demo(tmp_path / "part", epochs=3))
        assert resumed["report"].to_json() == full["report"].to_json()
        assert (tmp_path / "part" / "ckpt" / "last").read_bytes() == (tmp_path / "full" / "ckpt" / "last").read_bytes()

    def test_failing_stage(self, tmp_path):
        cfg = tiny_demo(tmp_path / "f")
        cfg.gen = {"n_users": -1}
        with pytest.raises(pipeline.StageFailed) as info:
            pipeline.run_demo(cfg)
        assert info.value.stage == "gen"
        cfg_path = write_json(tmp_path / "p.json", {"gen": {"n_users": -1}, "workdir": str(tmp_path / "g")})
        assert cli.main(["demo", "smoke", "--config", cfg_path]) == 2
