import json

import pytest

from gazevlp import cli
from gazevlp.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from gazevlp.supervision import NonFiniteLoss


def test_defaults_and_overrides(tmp_path):
    cfg = load_config(None, [])
    assert cfg.optimizer.batch_size == 16 and cfg.optimizer.lr == 1e-3 and cfg.optimizer.epochs == 30
    assert cfg.supervision.lam == 0.8 and cfg.supervision.rho == 0.25
    path = tmp_path / "c.yaml"
    path.write_text("supervision:\n  lambda: 0.5\n  gaze_loss: mask\nseed: 3\n"
                    "data:\n  synthetic:\n    n_studies: 12\n")
    cfg = load_config(path, ["optimizer.lr=0.01", "supervision.lambda=0.6", "data.synthetic.seed=9"])
    assert cfg.supervision.lam == 0.6 and cfg.supervision.gaze_loss == "mask"
    assert cfg.optimizer.lr == 0.01 and cfg.seed == 3
    assert cfg.data.synthetic.n_studies == 12 and cfg.data.synthetic.seed == 9


@pytest.mark.parametrize("override", ["optimizer.nope=1", "supervision.gaze_loss=l1", "bogus=1",
                                      "supervision.rho=0", "noequals", "seed.x=1",
                                      "optimizer.lr=fast", "supervision.use_gaze=1", "model=3"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a list\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_hash_and_dump_round_trip(tmp_path):
    cfg = load_config(None, ["seed=4", "supervision.lambda=0.7"])
    assert cfg.config_hash() == load_config(None, ["supervision.lambda=0.7", "seed=4"]).config_hash()
    assert cfg.config_hash() != load_config(None, ["seed=5"]).config_hash()
    assert cfg.config_hash() == load_config(None, ["seed=4", "supervision.lambda=0.7",
                                                   "output_dir=elsewhere"]).config_hash()
    path = tmp_path / "dump.yaml"
    dump_config(cfg, path)
    assert load_config(path).config_hash() == cfg.config_hash()
    assert len(cfg.config_hash()) == 16


def test_every_field_has_a_default():
    assert isinstance(config_from_dict({}), RunConfig)


# -- CLI ---------------------------------------------------------------------

SMALL = ["--set", "data.synthetic.n_studies=30", "--set", "data.synthetic.gaze_fraction=0.2",
         "--set", "optimizer.epochs=1", "--set", "model.d=16", "--set", "model.layers=1"]


def test_cli_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    corpus = tmp_path / "c.jsonl"
    assert cli.main(["gen-corpus", *SMALL, "--output", str(corpus)]) == 0
    assert corpus.read_text().count("\n") == 30
    assert cli.main(["pretrain", *SMALL, "--set", f"output_dir={out}", "--set", f"data.corpus={corpus}"]) == 0
    assert (out / "best.cgz").exists() and (out / "config.yaml").exists()
    evals = SMALL + ["--set", "data.per_class=4", "--set", "data.eval_n_studies=60"]
    report = tmp_path / "r.json"
    assert cli.main(["eval-retrieval", *evals, "--checkpoint", str(out / "best.cgz"),
                     "--emit-plots", str(tmp_path / "p.svg"), "--out", str(report)]) == 0
    d = json.loads(report.read_text())
    assert set(d["p_at_k"]) == {"1", "5", "10"} and set(d["r_at_k"]) == {"5", "10"}
    assert (tmp_path / "p.svg").exists()
    capsys.readouterr()
    assert cli.main(["eval-zeroshot", *evals, "--checkpoint", str(out / "best.cgz")]) == 0
    zs = json.loads(capsys.readouterr().out)
    assert len(zs["auroc"]) == 5 and zs["config_hash"]
    assert cli.main(["gaze-export", *SMALL, "--set", f"data.corpus={corpus}", "--out", str(tmp_path / "gz")]) == 0


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["pretrain", "--set", "supervision.gaze_loss=l2"]) == 2
    assert cli.main(["pretrain", "--config", str(tmp_path / "none.yaml")]) == 2
    bad = tmp_path / "bad.cgz"
    bad.write_bytes(b"nope")
    assert cli.main(["eval-retrieval", "--checkpoint", str(bad)]) == 3
    corrupt = tmp_path / "c.jsonl"
    corrupt.write_text("{not json\n")
    assert cli.main(["pretrain", "--set", f"data.corpus={corrupt}", "--set", f"output_dir={tmp_path / 'o'}"]) == 3
    assert cli.main(["gaze-export", "--set", "data.synthetic.gaze_fraction=0", "--set",
                     "data.synthetic.n_studies=5", "--out", str(tmp_path / "g")]) == 3

    from gazevlp import training

    def explode(*a, **k):
        raise NonFiniteLoss("gaze", float("nan"))

    monkeypatch.setattr(training, "pretrain", explode)
    assert cli.main(["pretrain"]) == 4


def test_cli_temperature_flag(monkeypatch, tmp_path):
    from gazevlp import training
    seen = {}

    class R:
        output_dir = tmp_path
        best_checkpoint = last_checkpoint = tmp_path / "x"

    def fake(cfg, **k):
        seen["literal"] = cfg.supervision.temperature_literal
        return R()

    monkeypatch.setattr(training, "pretrain", fake)
    assert cli.main(["pretrain", "--temperature-literal"]) == 0
    assert seen["literal"] is True


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
