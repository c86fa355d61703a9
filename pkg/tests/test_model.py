import numpy as np
import pytest

from segstereo import data as D
from segstereo import model as M
from segstereo import tensor as T
from segstereo.data import collate
from segstereo.train import compute_losses
from segstereo.losses import LossWeights

SMALL = dict(shallow_channels=8, transform_channels=8, sem_channels=8, encoder_blocks=3,
             encoder_channels=8, decoder_channels=(8, 8, 8), max_disp=8)


def small(**kw):
    return M.build(M.ModelConfig(**{**SMALL, **kw}), seed=0)


def images(n, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 255, size=(n, 3, h, w)), rng.uniform(0, 255, size=(n, 3, h, w))


@pytest.mark.parametrize("h,w", [(8, 8), (16, 40), (24, 16)])
def test_full_resolution_output(h, w):
    state = small()
    out = M.forward(state, *images(2, h, w))
    assert out.disparity.shape == (2, 1, h, w)
    assert out.cost_volume.shape == (2, 9, h // 8, w // 8)
    assert out.left_sem_logits.shape == (2, 4, h // 8, w // 8)
    assert np.all(out.disparity.data >= 0)


def test_default_cost_volume_width():
    cfg = M.ModelConfig()
    assert cfg.cost_channels == 25
    assert cfg.hybrid_channels == 25 + 64 + 64
    assert M.ModelConfig(embed_semantics=False).hybrid_channels == 25 + 64


def test_input_errors():
    state = small()
    with pytest.raises(ValueError):
        M.forward(state, *images(1, 12, 16))
    l, r = images(1, 16, 16)
    with pytest.raises(ValueError):
        M.forward(state, l, r[..., :8])
    with pytest.raises(ValueError):
        M.ModelConfig(decoder_blocks=2, decoder_channels=(8, 8))


def test_embedding_toggle_changes_only_encoder_input_width():
    on, off = small(), small(embed_semantics=False)
    diff = {k for k in on.params if on.params[k].shape != off.params[k].shape}
    assert diff == {"enc.0.conv1.w", "enc.0.skip.w"}
    assert on.params["enc.0.conv1.w"].shape[1] - off.params["enc.0.conv1.w"].shape[1] == 8
    assert on.num_parameters() - off.num_parameters() == 8 * 8 * 9 + 8 * 8


def test_build_is_deterministic_and_freezes_pretrained_branches():
    a, b = small(), small()
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert all(k.startswith(("shallow.", "seg.")) for k in a.frozen)
    assert "regress.w" in a.trainable() and "classifier.w" in a.trainable()
    assert float(a.params["regress.b"][0]) == 1.0
    np.testing.assert_array_equal(a.params["classifier.w"], a.params["seg.head.w"])


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    state = small(embed_semantics=False)
    state.params["regress.w"] += 0.25
    M.save_checkpoint(tmp_path / "a.ssm", state, {"velocity.regress.w": np.ones_like(state.params["regress.w"])})
    back, extra = M.load_checkpoint(tmp_path / "a.ssm")
    assert back.config == state.config
    assert all(back.params[k].tobytes() == state.params[k].tobytes() for k in state.params)
    assert list(extra) == ["velocity.regress.w"]
    M.save_checkpoint(tmp_path / "b.ssm", back, extra)
    assert (tmp_path / "a.ssm").read_bytes() == (tmp_path / "b.ssm").read_bytes()
    assert (tmp_path / "a.ssm").read_bytes()[:8] == b"SSMINI01"


def test_checkpoint_rejects_bad_files(tmp_path):
    (tmp_path / "x.ssm").write_bytes(b"NOTACKPT")
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "x.ssm")
    M.save_checkpoint(tmp_path / "a.ssm", small())
    raw = (tmp_path / "a.ssm").read_bytes()
    (tmp_path / "t.ssm").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        M.load_checkpoint(tmp_path / "t.ssm")


def test_gradients_reach_regressor_from_every_unsupervised_term():
    state = small()
    s = D.gen_scene(D.SceneConfig(height=16, width=32, disparity_range=(1, 7), max_disp=8, seed=1))
    batch = collate([s])
    names = state.trainable()
    for w in (LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1)):
        p = state.tensors(names)
        with T.Tape() as tape:
            total, report, _ = compute_losses(state, batch, "unsupervised", w, p)
        g = T.backward(tape, total)
        assert p["regress.w"].node_id in g, w
        assert np.abs(g[p["regress.w"].node_id].data).sum() > 0, w
        assert all(p[n].node_id not in g for n in state.frozen)


def test_float32_forward_is_batch_independent():
    state = small()
    l, r = images(3, 16, 16, seed=4)
    whole = M.forward(state, l, r).disparity.data
    one = M.forward(state, l[1:2], r[1:2]).disparity.data
    np.testing.assert_allclose(whole[1:2], one, rtol=1e-5, atol=1e-5)
