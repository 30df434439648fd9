import numpy as np
import pytest

from densemsa.checkpoint import (Checkpoint, CheckpointError, load_checkpoint, parameter_section,
                                 save_checkpoint)
from densemsa.data import collate
from densemsa.inference import greedy_decode
from densemsa.model import Model, ModelConfig
from densemsa.synth import builtin_vocab, synth_corpus
from densemsa.trainer import TrainConfig, train

VOCAB = builtin_vocab()


@pytest.fixture(scope="module")
def trained():
    data = synth_corpus(4, seed=0)
    m = Model(ModelConfig.tiny(), VOCAB, seed=1)
    r = train(m, data, data, TrainConfig(batch_size=2, max_epochs=2))
    return m, r


def test_round_trip_restores_every_array(tmp_path, trained):
    m, _ = trained
    path = save_checkpoint(Checkpoint.from_model(m, {"seed": 1, "step": 4}), tmp_path / "a.ckpt")
    ck = load_checkpoint(path)
    assert ck.vocab == VOCAB and ck.model_config == m.cfg
    assert ck.meta == {"seed": 1, "step": 4}
    for k, v in m.state_arrays().items():
        np.testing.assert_array_equal(ck.arrays[k], v)
    assert ck.arrays["buffer/enc.stem.bn.var"].any()


def test_save_load_save_is_byte_identical(tmp_path, trained):
    m, r = trained
    first = save_checkpoint(Checkpoint(m.cfg, VOCAB, r.best.arrays, {"seed": 1}), tmp_path / "1.ckpt")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "2.ckpt")
    assert parameter_section(first) == parameter_section(second)
    assert first.read_bytes() == second.read_bytes()
    assert any(k.startswith("slot/") for k in load_checkpoint(second).arrays)


def test_greedy_decodes_survive_reload(tmp_path, trained):
    m, _ = trained
    samples = synth_corpus(10, seed=7)
    before = greedy_decode(m, collate(samples, VOCAB), max_len=20)
    path = save_checkpoint(Checkpoint.from_model(m, {"seed": 1}), tmp_path / "m.ckpt")
    after = greedy_decode(load_checkpoint(path).build_model(), collate(samples, VOCAB), max_len=20)
    assert before == after


def test_version_mismatch_rejected(tmp_path, trained):
    m, _ = trained
    path = save_checkpoint(Checkpoint.from_model(m), tmp_path / "v.ckpt")
    raw = path.read_bytes()
    at = raw.index(b"format_version = 1") + len("format_version = ")
    path.write_bytes(raw[:at] + b"2" + raw[at + 1:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path, trained):
    m, _ = trained
    path = save_checkpoint(Checkpoint.from_model(m), tmp_path / "t.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="length|truncat"):
        load_checkpoint(path)
    path.write_bytes(raw[:40])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corruption_rejected(tmp_path, trained):
    m, _ = trained
    path = save_checkpoint(Checkpoint.from_model(m), tmp_path / "c.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-50] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="sha256|checksum"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"hello\nend_header\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_config_alone_rebuilds_architecture(tmp_path):
    cfg = ModelConfig.tiny(branch_depth=None, dropout=0.1)
    m = Model(cfg, VOCAB, seed=3)
    ck = load_checkpoint(save_checkpoint(Checkpoint.from_model(m), tmp_path / "s.ckpt"))
    rebuilt = ck.build_model()
    assert rebuilt.cfg == cfg
    assert sorted(rebuilt.params) == sorted(m.params)
