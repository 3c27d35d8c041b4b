import json

import numpy as np
import pytest

from hysp_lab import trainer
from hysp_lab.checkpoint import encode, load_checkpoint, save_checkpoint
from hysp_lab.config import config_hash, load_config, to_dict
from hysp_lab.errors import CorruptCheckpoint, InvalidInput

from helpers import tiny_config


@pytest.fixture
def trained(tiny_data):
    cfg = tiny_config(epochs=1, select_best=False)
    return trainer.pretrain(cfg, tiny_data)[0]


def test_save_load_save_identical(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.bin")
    back = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert back.epoch == 1
    assert set(back.twin.online) == set(trained.twin.online)
    assert any(k.endswith("bn.gamma") for k in back.twin.online)


def test_queue_round_trip(tiny_data, tmp_path):
    cfg = tiny_config(epochs=1, with_negatives=True, queue_capacity=6, select_best=False)
    ckpt = trainer.pretrain(cfg, tiny_data)[0]
    save_checkpoint(ckpt, tmp_path / "q.bin")
    assert np.array_equal(load_checkpoint(tmp_path / "q.bin").queue, ckpt.queue)


def test_wrong_magic(trained, tmp_path):
    raw = bytearray(encode(trained))
    raw[:4] = b"NOPE"
    (tmp_path / "x.bin").write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x.bin")


def test_truncated(trained, tmp_path):
    (tmp_path / "x.bin").write_bytes(encode(trained)[:-9])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x.bin")


def test_trailing_bytes(trained, tmp_path):
    (tmp_path / "x.bin").write_bytes(encode(trained) + b"\0")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "x.bin")


def test_hash_mismatch_warns(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "a.bin")
    with pytest.warns(UserWarning):
        load_checkpoint(tmp_path / "a.bin", expected_hash="0" * 64)


def test_resume_from_file_matches(tiny_data, tmp_path):
    cfg = tiny_config(epochs=2, select_best=False)
    full = trainer.pretrain(cfg, tiny_data)[0]
    save_checkpoint(trainer.pretrain(cfg, tiny_data, stop_epoch=1)[0], tmp_path / "half.bin")
    resumed = trainer.pretrain(cfg, tiny_data, resume=load_checkpoint(tmp_path / "half.bin"))[0]
    assert encode(resumed) == encode(full)


class TestConfig:
    def test_desk_defaults(self):
        cfg = load_config()
        t = cfg.train
        assert (t.batch_size, t.lr, t.epochs, t.e1, t.e2, t.ema_coefficient) == (32, 0.05, 30, 6, 12, 0.99)
        assert cfg.data.amplitudes == (0.05, 0.3, 1.0) and cfg.data.n_per_class == 100

    def test_full_preset(self):
        t = load_config(preset="full").train
        assert (t.epochs, t.e1, t.e2) == (200, 50, 100)

    def test_unknown_key(self):
        with pytest.raises(InvalidInput):
            load_config(overrides={"train": {"learning_rate": 1}})

    def test_unknown_preset(self):
        with pytest.raises(InvalidInput):
            load_config(preset="cluster")

    def test_invalid_schedule(self):
        with pytest.raises(InvalidInput):
            load_config(overrides={"train": {"e1": 12, "e2": 6}})

    def test_file_merge_and_hash(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 7, "train": {"epochs": 3}}))
        cfg = load_config(p)
        assert cfg.seed == 7 and cfg.train.epochs == 3 and cfg.train.lr == 0.05
        assert config_hash(cfg) == config_hash(load_config(p))
        assert config_hash(cfg) != config_hash(load_config())
        assert to_dict(cfg)["train"]["epochs"] == 3
