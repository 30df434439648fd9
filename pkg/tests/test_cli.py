from pathlib import Path

import pytest

from densemsa.checkpoint import Checkpoint, save_checkpoint
from densemsa.cli import main
from densemsa.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from densemsa.data import Vocabulary
from densemsa.model import Model, ModelConfig
from densemsa.synth import builtin_vocab

QUICK = ["--synth-train", "6", "--preset", "tiny", "--max-epochs", "2", "--batch-size", "3"]


# configuration

def test_every_field_has_a_default():
    cfg = parse_config("")
    assert cfg == RunConfig()


def test_config_round_trip():
    cfg = parse_config("preset = tiny\nbranch_depth = off\nbatch_size = 4\nstop_at_wer = 0.1\n")
    assert cfg.model_config().encoder.branch_depth is None
    assert cfg.train_config().batch_size == 4
    assert parse_config(dump_config(cfg)) == cfg


def test_config_errors_name_line_and_field():
    with pytest.raises(ConfigError, match=r"<config>:2: unknown key 'beam_width'"):
        parse_config("beam = 3\nbeam_width = 4\n")
    with pytest.raises(ConfigError, match=r":1: batch_size"):
        parse_config("batch_size = eight")
    with pytest.raises(ConfigError, match=":3:"):
        parse_config("# comment\n\nno equals sign")
    with pytest.raises(ConfigError):
        parse_config("preset = huge").model_config()
    with pytest.raises(ConfigError):
        parse_config("branch_depth = 3").model_config()
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_bundled_toy_config_parses():
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.cfg")
    mc = cfg.model_config()
    assert mc.encoder.growth_rate == 4 and mc.encoder.block_depth == 4
    assert mc.encoder.branch_depth == 2
    assert (mc.decoder.embed_dim, mc.decoder.hidden_dim, mc.decoder.attn_dim) == (16, 16, 32)


# train

def test_train_writes_outputs_and_is_reproducible(tmp_path, capsys):
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", *QUICK, "--output-dir", str(out)]) == 0
        for name in ("best.ckpt", "last.ckpt", "train.log", "config.cfg"):
            assert (out / name).is_file()
        logs.append((out / "train.log").read_text())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == "# step\ttrain_loss\tvalid_wer"
    assert len(logs[0].splitlines()) == 3


def test_train_missing_dataset_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope" / "manifest.tsv"
    assert main(["train", "--train-manifest", str(missing), "--output-dir", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("preset = tiny\nlearning_rate = 3\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err


# recognize / evaluate

@pytest.fixture
def ckpt(tmp_path):
    m = Model(ModelConfig.tiny(), builtin_vocab(), seed=0)
    return save_checkpoint(Checkpoint.from_model(m, {"seed": 0}), tmp_path / "m.ckpt")


def test_recognize_empty_list(tmp_path, ckpt):
    lst = tmp_path / "empty.txt"
    lst.write_text("")
    out = tmp_path / "pred.txt"
    assert main(["recognize", "--checkpoint", str(ckpt), "--images", str(lst), "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_recognize_with_heatmaps(tmp_path, ckpt):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--n", "3", "--seed", "1"]) == 0
    out, att = tmp_path / "pred.txt", tmp_path / "att"
    rc = main(["recognize", "--checkpoint", str(ckpt), "--checkpoint", str(ckpt),
               "--images", str(data / "manifest.tsv"), "--out", str(out), "--beam", "2",
               "--max-len", "6", "--dump-attention", str(att)])
    assert rc == 0
    preds = out.read_text().splitlines()
    assert len(preds) == 3
    total = sum(len(p.split()) for p in preds)
    assert len(list(att.glob("*.png"))) == 2 * total
    assert len(list(att.glob("*_low.png"))) == total


def test_recognize_rejects_incompatible_ensemble(tmp_path, ckpt):
    other = save_checkpoint(Checkpoint.from_model(Model(ModelConfig.tiny(), Vocabulary(["x"]))),
                            tmp_path / "o.ckpt")
    lst = tmp_path / "l.txt"
    lst.write_text("")
    out = tmp_path / "p.txt"
    rc = main(["recognize", "--checkpoint", str(ckpt), "--checkpoint", str(other),
               "--images", str(lst), "--out", str(out)])
    assert rc == 2 and not out.exists()


def test_recognize_missing_inputs(tmp_path, ckpt, capsys):
    assert main(["recognize", "--images", "x", "--out", "y"]) == 2
    assert main(["recognize", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--images", "x", "--out", "y"]) == 2
    lst = tmp_path / "l.txt"
    lst.write_text("ghost.pgm\n")
    assert main(["recognize", "--checkpoint", str(ckpt), "--images", str(lst), "--out", "y"]) == 2
    assert "ghost.pgm" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_1(tmp_path, ckpt):
    raw = ckpt.read_bytes()
    ckpt.write_bytes(raw[:-10])
    lst = tmp_path / "l.txt"
    lst.write_text("")
    assert main(["recognize", "--checkpoint", str(ckpt), "--images", str(lst),
                 "--out", str(tmp_path / "p")]) == 1


def test_evaluate_report(tmp_path, capsys):
    refs = tmp_path / "refs.tsv"
    refs.write_text("a.pgm\t1 + 2\nb.pgm\t3 = 4\n")
    preds = tmp_path / "preds.txt"
    preds.write_text("1 + 2\n3\n")
    assert main(["evaluate", "--predictions", str(preds), "--references", str(refs),
                 "--out", str(tmp_path / "rep")]) == 0
    kv = dict(line.split(" = ") for line in (tmp_path / "rep" / "report.kv").read_text().splitlines())
    assert {"exprate", "le1", "le2", "le3", "wer", "n"} <= set(kv)
    assert (float(kv["exprate"]), float(kv["le1"]), float(kv["le2"])) == (0.5, 0.5, 1.0)
    assert "exprate\t0.5" in capsys.readouterr().out


def test_evaluate_count_mismatch(tmp_path, capsys):
    refs = tmp_path / "refs.tsv"
    refs.write_text("a.pgm\t1\nb.pgm\t2\n")
    preds = tmp_path / "preds.txt"
    preds.write_text("1\n")
    assert main(["evaluate", "--predictions", str(preds), "--references", str(refs),
                 "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    assert "1 predictions" in err and "2 references" in err


def test_synth_command(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "4", "--tier", "2"]) == 0
    assert len(list(tmp_path.glob("synth_*.pgm"))) == 4
    assert (tmp_path / "vocab.txt").read_text().split() == builtin_vocab().symbols


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--samples", "20"]) == 0
    assert capsys.readouterr().out.strip().endswith("sampled entries")
