import struct

import numpy as np
import pytest

from captionedit import checkpoint as ckpt
from captionedit.data import build_vocab, generate_corpus, vocab_sentences
from captionedit.gradcheck import tiny_config
from captionedit.models import ModelConfig
from captionedit.objectives import AdamState
from captionedit.train import Editor


def _tensors(rng):
    return {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(np.pi),
            "edge": np.array([0.0, -0.0, 1e-308, np.finfo(float).max])}


def _editor():
    corpus = generate_corpus(0, 20)
    vocab = build_vocab(vocab_sentences(corpus), min_count=1)
    cfg = ModelConfig.from_dict({**tiny_config().to_dict(), "vocab_size": len(vocab)})
    return Editor(cfg, vocab, seed=3)


class TestFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        t = _tensors(rng)
        opt = AdamState(lr=1e-3, step=17, m={"a": rng.normal(size=(3, 4))}, v={"a": rng.random((3, 4))})
        ckpt.save(tmp_path / "x.ckpt", {"k": [1, "two"]}, t, {"main": opt}, epoch=9)
        meta, t2, opts, epoch = ckpt.load(tmp_path / "x.ckpt")
        assert meta == {"k": [1, "two"]} and epoch == 9
        for name in t:
            assert t2[name].shape == t[name].shape
            assert t2[name].tobytes() == t[name].tobytes()
        o = opts["main"]
        assert (o.step, o.lr, o.beta1, o.beta2, o.eps) == (17, 1e-3, 0.9, 0.999, 1e-8)
        assert o.m["a"].tobytes() == opt.m["a"].tobytes() and o.v["a"].tobytes() == opt.v["a"].tobytes()

    def test_save_is_deterministic(self, tmp_path):
        t = _tensors(np.random.default_rng(1))
        ckpt.save(tmp_path / "a", {"x": 1}, t)
        ckpt.save(tmp_path / "b", {"x": 1}, t)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert not list(tmp_path.glob("*.tmp"))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(ckpt.CheckpointError, match="magic"):
            ckpt.load(tmp_path / "x")

    def test_bad_version(self, tmp_path):
        (tmp_path / "x").write_bytes(ckpt.MAGIC + struct.pack("<I", 99))
        with pytest.raises(ckpt.CheckpointError, match="version"):
            ckpt.load(tmp_path / "x")

    @pytest.mark.parametrize("keep", [10, 30, 100, -1])
    def test_truncation(self, tmp_path, keep):
        ckpt.save(tmp_path / "x", {"m": "meta"}, _tensors(np.random.default_rng(2)))
        raw = (tmp_path / "x").read_bytes()
        (tmp_path / "y").write_bytes(raw[:keep])
        with pytest.raises(ckpt.CheckpointError, match="truncated"):
            ckpt.load(tmp_path / "y")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ckpt.load(tmp_path / "none")


class TestEditorPersistence:
    def test_round_trip(self, tmp_path):
        ed = _editor()
        ed.epochs = {"editnet": 4, "dcnet": 2}
        ed.opt["editnet"].step = 3
        ed.save(tmp_path / "m.ckpt")
        back = Editor.load(tmp_path / "m.ckpt")
        assert back.vocab.itos == ed.vocab.itos and back.config == ed.config
        assert back.epochs == ed.epochs and back.opt["editnet"].step == 3
        for name, arr in ed.tensors().items():
            assert back.tensors()[name].tobytes() == arr.tobytes()

    def test_vocab_mismatch(self, tmp_path):
        ed = _editor()
        meta = {"model": {**ed.config.to_dict(), "vocab_size": len(ed.vocab) + 1}, "vocab": ed.vocab.itos[4:]}
        ckpt.save(tmp_path / "m", meta, ed.tensors())
        with pytest.raises(ckpt.CheckpointError, match="vocabulary"):
            Editor.load(tmp_path / "m")

    def test_missing_tensor(self, tmp_path):
        ed = _editor()
        t = ed.tensors()
        del t["out.W"]
        ckpt.save(tmp_path / "m", {"model": ed.config.to_dict(), "vocab": ed.vocab.itos[4:]}, t)
        with pytest.raises(ckpt.CheckpointError, match="out.W"):
            Editor.load(tmp_path / "m")

    def test_shape_mismatch(self, tmp_path):
        ed = _editor()
        t = ed.tensors()
        t["dc.emb"] = t["dc.emb"][:, :2]
        ckpt.save(tmp_path / "m", {"model": ed.config.to_dict(), "vocab": ed.vocab.itos[4:]}, t)
        with pytest.raises(ckpt.CheckpointError, match="shape"):
            Editor.load(tmp_path / "m")
