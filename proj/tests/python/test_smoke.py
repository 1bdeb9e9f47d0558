import json
import math

import numpy as np
import pytest

import a3net


def test_tokenize_and_vocabulary():
    assert a3net.tokenize("The heart is normal.") == ["the", "heart", "is", "normal"]
    vocab = a3net.Vocabulary.build(["the heart", "the lungs"], min_freq=1)
    assert vocab.tokens()[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert len(vocab) == 7
    assert vocab.decode(vocab.encode("the heart")) == "the heart"


def test_tensor_ops():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(a3net.matmul(a, b), a @ b)
    np.testing.assert_allclose(a3net.softmax(np.array([[0.0, math.log(2.0)]])), [[1 / 3, 2 / 3]])
    out = a3net.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=0.0)
    np.testing.assert_allclose(out, [[-1.0, 1.0]])


def test_metrics():
    assert a3net.bleu(["the the the the"], ["the cat sat down"], n=1) == pytest.approx(0.25)
    assert a3net.rouge_l(["a c d"], ["a b c d"]) == pytest.approx(6 / 7)
    assert a3net.meteor(["the heart"], ["the heart"]) == pytest.approx(0.9375)
    scores = a3net.evaluate(["no acute findings"], ["no acute findings"])
    assert list(scores) == ["BL-1", "BL-2", "BL-3", "BL-4", "MTR", "RG-L"]
    assert scores["BL-1"] == 1.0


def test_config():
    text = a3net.full_scale_config()
    assert "d_model = 512" in text
    assert "beam_size = 3" in text
    assert a3net.resolve_config(text) == text
    with pytest.raises(a3net.ConfigError, match="line 2"):
        a3net.resolve_config("[model]\nwidth = 3\n")
    assert a3net.model_digest("[model]\ninit_seed = 9\n") == a3net.model_digest("")


def test_synthetic_reports_are_seeded():
    a = a3net.synthetic_reports(3, 10)
    assert a == a3net.synthetic_reports(3, 10)
    assert len(a) == 10 and a[0][0] == "s00000"


def test_train_and_generate(tmp_path):
    corpus = str(tmp_path / "corpus")
    code, out, err = a3net.run_cli(["gen-data", "--seed", "2", "--samples", "24", "--out", corpus])
    assert code == 0, err
    assert json.loads(a3net.corpus_stats(corpus))["train"]["report"] > 0
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "[model]\nd_model = 16\nheads = 2\nlayers = 1\nd_vis = 16\nconv_channels = 4,8\n"
        "[train]\nepochs = 1\nmin_freq = 1\nval_metrics = false\n[decode]\nmax_len = 12\n"
    )
    run = str(tmp_path / "run")
    code, _, err = a3net.run_cli(["train", "--config", str(cfg), "--corpus", corpus, "--out", run])
    assert code == 0, err
    ckpt = a3net.Checkpoint(run + "/last.ckpt")
    assert ckpt.epoch == 1
    image = np.random.default_rng(0).random((32, 32))
    text = ckpt.generate([image], beam=2)
    assert isinstance(text, str)
    assert len(text.split()) <= 12
    with pytest.raises(a3net.CheckpointError):
        a3net.Checkpoint(str(tmp_path / "missing.ckpt"))
