import json

import numpy as np
import pytest

import keydyn


@pytest.fixture(scope="module")
def corpus():
    return keydyn.synthesize(subjects=8, sessions=15, keys=40, seed=3)


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    losses = keydyn.train(corpus, out, steps=4, seed=1)
    assert len(losses) == 4
    assert all(np.isfinite(losses))
    return out


def test_synthesize_is_reproducible(corpus, tmp_path):
    assert len(corpus) == 120
    assert corpus == keydyn.synthesize(subjects=8, sessions=15, keys=40, seed=3)
    path = tmp_path / "d.jsonl"
    keydyn.save_sessions(path, corpus[:3])
    assert keydyn.load_sessions(path) == corpus[:3]


def test_model_embeds_and_evaluates(corpus, checkpoint):
    model = keydyn.Model.load(checkpoint)
    assert len(model.hash) == 16
    assert model.config["mode"] == "bi"
    events = corpus[0]["events"]
    a = model.embed(events)
    assert a.shape == (model.config["out_dim"],)
    assert np.array_equal(a, keydyn.Model.load(checkpoint).embed(events))
    report = model.evaluate(corpus, E=5, L=40)
    assert 0.0 <= report["adaptive_eer"] <= 1.0


def test_eer_and_score():
    assert keydyn.eer([5, 6, 7], [1, 2, 3]) == 0.0
    assert keydyn.eer([3, 1], [2, 0]) == 0.5
    enrollment = [np.array([1.0, 0.0]), np.array([0.9, 0.1])]
    near = keydyn.score(np.array([1.0, 0.05]), enrollment)
    far = keydyn.score(np.array([-1.0, 0.0]), enrollment)
    assert near > far
    assert keydyn.score(enrollment[0], enrollment[:1]) == 0.0
    with pytest.raises(keydyn.KeydynError):
        keydyn.score(enrollment[0], enrollment[:1], kind="ocsvm")


def test_cli_round_trip(checkpoint, corpus, tmp_path):
    data = tmp_path / "d.jsonl"
    keydyn.save_sessions(data, corpus)
    code, out, err = keydyn.cli(["eval", "--ckpt", str(checkpoint), "--data", str(data), "--E", "1", "--L", "40"])
    assert code == 0, err
    assert "adaptive_eer" in json.loads(out)
    code, _, err = keydyn.cli(["eval", "--bogus"])
    assert code == 1
    assert err.startswith("error: usage:")
