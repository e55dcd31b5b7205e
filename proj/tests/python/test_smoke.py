import json

import numpy as np
import pytest

import marf


def test_intersect_atom_hits_the_near_side():
    atom = marf.MedialAtom(np.zeros(3), 0.5)
    out = marf.intersect_atom(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.0, 1.0]), atom)
    assert out.hit
    np.testing.assert_allclose(out.point, [0.0, 0.0, -0.5], atol=1e-12)
    miss = marf.intersect_atom(np.array([0.8, 0.0, -2.0]), np.array([0.0, 0.0, 1.0]), atom)
    assert not miss.hit
    assert miss.silhouette == pytest.approx(0.3)


def test_canonicalize_is_origin_invariant():
    q = np.array([1.0, 2.0, -0.5])
    a = marf.canonicalize(np.array([0.1, 0.2, 0.3]), q)
    b = marf.canonicalize(np.array([0.1, 0.2, 0.3]) + 4.0 * q, q)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_shape_cast():
    hit = marf.Shape.parse("sphere:0.5").cast(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.0, 1.0]))
    assert hit is not None
    np.testing.assert_allclose(hit[1], [0.0, 0.0, -1.0], atol=1e-12)
    with pytest.raises(marf.InvalidInputError):
        marf.Shape.parse("blob:1")


def test_config_presets_and_unknown_keys():
    desk = json.loads(marf.config("desk"))
    paper = json.loads(marf.config("paper"))
    assert desk["network"]["width"] == 128
    assert paper["network"]["width"] == 512
    assert json.loads(marf.config("desk", '{"train": {"seed": 3}}'))["train"]["seed"] == 3
    with pytest.raises(marf.InvalidInputError):
        marf.config("desk", '{"network": {"widht": 1}}')


def test_metrics():
    assert marf.classification([0, 1, 1, 1, 0, 0], [0, 0, 1, 1, 1, 0]) == pytest.approx((2 / 3, 2 / 3, 0.5))
    assert marf.chamfer(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0
    rep = marf.evaluate_oracle("torus:0.6,0.25", "torus:0.6,0.25", budget=1000, samples=200)
    assert rep["iou"] == 1.0 and rep["cd"] == 0.0


def test_gradcheck_passes_and_detects_perturbation():
    assert all(c["pass"] for c in marf.gradcheck("p"))
    assert not marf.gradcheck("p", perturb=0.01)[0]["pass"]


def test_train_render_evaluate(tmp_path):
    ds = str(tmp_path / "s.marfds")
    ckpt = str(tmp_path / "s.ckpt")
    marf.make_dataset(["sphere:0.5"], ds, views=4, resolution=16)
    overrides = json.dumps({
        "network": {"hidden_layers": 2, "width": 32, "n_atoms": 4},
        "train": {"epochs": 4, "hold_epochs": 2, "decay_epochs": 2, "warmup_steps": 4, "batch_size": 2},
    })
    losses = marf.train(ds, ckpt, overrides=overrides)
    assert len(losses) == 4
    assert losses[-1] < losses[0]

    state = marf.Checkpoint.load(ckpt)
    assert state.epoch == 4 and state.head == "marf" and state.n_atoms == 4
    origins = np.array([[0.0, 0.0, -2.0], [0.9, 0.9, -2.0]])
    dirs = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    assert state.predict(origins, dirs).shape == (2, 16)
    surf = state.surface(origins, dirs)
    assert surf["point"].shape == (2, 3)

    for mode in marf.render_modes():
        img, winner = marf.render(state, np.array([0.0, 0.0, 1.0]), resolution=16, mode=mode)
        assert img.shape == (16, 16, 3) and img.dtype == np.uint8
        assert len(winner) == 256

    rep = marf.evaluate(state, "sphere:0.5", budget=1000, samples=200)
    assert 0.0 <= rep["iou"] <= 1.0
    assert rep["cos_medial"] is not None and rep["cos_analytical"] is not None

    with pytest.raises(marf.FormatError):
        marf.Checkpoint.load(str(tmp_path / "missing.ckpt"))
