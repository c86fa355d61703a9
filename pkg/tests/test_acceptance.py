"""End-to-end acceptance checks, one reported PASS/FAIL line per criterion.

Training-based checks use a fixed desk-scale setup: 200 training scenes and
a 20-scene validation set at 64x128, disparities 1-8 px, lr 0.003, batch 4.
"""
import time

import numpy as np
import pytest

from segstereo import data as D
from segstereo import losses as L
from segstereo import metrics
from segstereo import model as M
from segstereo import nn
from segstereo import tensor as T
from segstereo import train as TR
from segstereo.stereo import correlation1d, warp_horizontal
from conftest import report
from test_stereo import corr_oracle

INSTANCES = 20
GRAD_TOL = 1e-4


def _away_from_integers(rng, lo, hi, size, margin=0.05):
    d = rng.uniform(lo, hi, size=size)
    frac = d - np.round(d)
    return np.where(np.abs(frac) < margin, d + 2 * margin, d)


def _project(out, up):
    return T.sum_(T.mul(out, T.Tensor(up)))


def _grad_cases(rng):
    """Yield (op name, [(function, point), ...]) for one random instance of every op."""
    n, c, h, w = 1, int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(3, 6))
    x = rng.normal(size=(n, c, h, w))

    o, k = int(rng.integers(1, 3)), int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    wt = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        pad = k // 2
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    up = rng.normal(size=(n, o, ho, wo))
    conv = lambda xx, ww, bb: _project(nn.conv2d(xx, nn.ConvParams(ww, bb, stride, pad)), up)
    yield "conv2d", [(lambda t: conv(t, T.Tensor(wt), T.Tensor(b)), x),
                     (lambda t: conv(T.Tensor(x), t, T.Tensor(b)), wt),
                     (lambda t: conv(T.Tensor(x), T.Tensor(wt), t), b)]

    dw = rng.normal(size=(c, o, 4, 4))
    dup = rng.normal(size=(n, o, 2 * h, 2 * w))
    deconv = lambda xx, ww, bb: _project(nn.deconv2d(xx, nn.ConvParams(ww, bb, 2, 1)), dup)
    yield "deconv2d", [(lambda t: deconv(t, T.Tensor(dw), T.Tensor(b)), x),
                       (lambda t: deconv(T.Tensor(x), t, T.Tensor(b)), dw),
                       (lambda t: deconv(T.Tensor(x), T.Tensor(dw), t), b)]

    oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    rup = rng.normal(size=(n, c, oh, ow))
    yield "bilinear_resize", [(lambda t: _project(nn.bilinear_resize(t, oh, ow), rup), x)]

    kcls = int(rng.integers(2, 5))
    logits = rng.normal(scale=2, size=(n, kcls, h, w))
    labels = rng.integers(0, kcls, size=(n, h, w))
    labels[0, 0, 0] = 255
    yield "softmax_cross_entropy", [(lambda t: nn.softmax_cross_entropy(t, labels), logits)]

    md = int(rng.integers(0, w))
    right = rng.normal(size=x.shape)
    cup = rng.normal(size=(n, md + 1, h, w))
    yield "correlation1d", [(lambda t: _project(correlation1d(t, T.Tensor(right), md), cup), x),
                            (lambda t: _project(correlation1d(T.Tensor(x), t, md), cup), right)]

    disp = _away_from_integers(rng, 0.1, w - 1.1, (n, 1, h, w))
    wup = rng.normal(size=x.shape)
    yield "warp_horizontal", [(lambda t: _project(warp_horizontal(t, T.Tensor(disp))[0], wup), x),
                              (lambda t: _project(warp_horizontal(T.Tensor(x), t)[0], wup), disp)]

    # residuals kept away from zero and from the threshold so the check sees smooth pieces
    img = rng.uniform(50, 200, size=(n, 3, h, w))
    sign = rng.choice([-1.0, 1.0], size=img.shape)
    other = img + sign * rng.uniform(0.5, 2.5, size=img.shape)
    valid = (rng.random((n, 1, h, w)) > 0.2).astype(float)
    yield "photometric_loss", [(lambda t: L.photometric_loss(t, T.Tensor(img), valid), other),
                               (lambda t: L.photometric_loss(T.Tensor(other), t, valid), img)]

    yield "smoothness_loss", [(lambda t: L.smoothness_loss(t), rng.uniform(0, 5, size=(n, 1, h, w)))]

    feat = rng.normal(size=(n, 2, 1, 2))
    clf = nn.ConvParams(T.Tensor(rng.normal(size=(3, 2, 1, 1))), T.Tensor(rng.normal(size=3)))
    slabels = rng.integers(0, 3, size=(n, 8, 16))
    sdisp = _away_from_integers(rng, 0.2, 3.8, (n, 1, 8, 16))
    yield "semantic_loss", [(lambda t: L.semantic_loss(t, T.Tensor(sdisp), clf, slabels), feat),
                            (lambda t: L.semantic_loss(T.Tensor(feat), t, clf, slabels), sdisp)]

    gt = rng.uniform(0, 5, size=(n, 1, h, w))
    pred = gt + rng.choice([-1.0, 1.0], size=gt.shape) * rng.uniform(0.1, 2, size=gt.shape)
    rvalid = np.ones(gt.shape, bool)
    rvalid[0, 0, 0, 0] = False
    yield "regression_loss", [(lambda t: L.regression_loss(t, gt, rvalid), pred)]


def test_1_gradient_suite():
    t0 = time.process_time()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for i in range(INSTANCES):
        rng = np.random.default_rng(1000 + i)
        for op, checks in _grad_cases(rng):
            err = max(T.grad_check(f, p) for f, p in checks)
            worst[op] = max(worst.get(op, 0.0), err)
            counts[op] = counts.get(op, 0) + 1
    cpu = time.process_time() - t0
    ok = all(e < GRAD_TOL for e in worst.values()) and min(counts.values()) >= 20 and len(counts) == 10 and cpu < 120
    top = max(worst, key=worst.get)
    report("1 gradient suite", ok,
           f"{len(counts)} ops x {min(counts.values())} instances, worst rel err {worst[top]:.2e} ({top}), {cpu:.1f}s CPU")
    assert ok, worst


def test_2_oracle_equivalence():
    worst = 0.0
    rng = np.random.default_rng(2)
    for shape, md in [((1, 1, 1, 1), 0), ((1, 2, 3, 5), 3), ((2, 4, 8, 16), 24), ((2, 4, 8, 16), 7), ((2, 3, 6, 10), 12)]:
        left, right = rng.normal(size=shape), rng.normal(size=shape)
        ref = corr_oracle(left, right, md)
        got = correlation1d(T.Tensor(left), T.Tensor(right), md).data
        worst = max(worst, np.max(np.abs(got - ref)) / max(1.0, np.max(np.abs(ref))))
    exact = True
    for shift in range(0, 9):
        src = rng.normal(size=(2, 3, 5, 12))
        out, _ = warp_horizontal(T.Tensor(src), T.Tensor(np.full((2, 1, 5, 12), float(shift))))
        exact &= np.array_equal(out.data[..., shift:], src[..., : 12 - shift]) and not out.data[..., :shift].any()
    ok = worst < 1e-6 and exact
    report("2 oracle equivalence", ok, f"correlation max rel err {worst:.1e}; integer warps exact: {exact}")
    assert ok


def test_3_closed_form_losses():
    ones = np.ones((1, 1, 1, 2))
    target = T.Tensor(np.zeros((1, 3, 1, 2)))
    warped = T.Tensor(np.array([[1.0, 4.0], [1.0, 4.0], [2.0, 4.0]])[None, :, None, :])
    photo = L.photometric_loss(warped, target, ones, 10.0).item()  # pixel 0: residual 4; pixel 1: 12
    per_pixel = 2 * L.charbonnier(np.zeros(1), 0.21, 5.0, 0.001)[0]
    const = L.smoothness_loss(T.Tensor(np.full((1, 1, 5, 5), 2.0))).item() * 25
    interior_ok = abs(const - 20 * per_pixel) < 1e-9
    reg = L.regression_loss(T.Tensor(np.array([1.0, 5.0, 0.0, 0.0]).reshape(1, 1, 2, 2)),
                            np.array([0.0, 2.0, 9.0, 9.0]).reshape(1, 1, 2, 2),
                            np.array([1, 1, 0, 0]).reshape(1, 1, 2, 2)).item()
    ce = nn.softmax_cross_entropy(T.Tensor(np.zeros((1, 7, 2, 2))), np.zeros((1, 2, 2), int)).item()
    ok = (photo == 2.0 and abs(per_pixel - 0.1099) <= 1e-4 and interior_ok
          and reg == 2.0 and abs(ce - np.log(7)) <= 1e-6)
    report("3 closed-form losses", ok,
           f"photometric {photo} (4 kept, 12 masked, /2 px), smoothness/px {per_pixel:.5f}, regression {reg}, CE-ln7 {ce - np.log(7):.1e}")
    assert ok


# ---------------------------------------------------------------------------
# training-based criteria share one dataset

@pytest.fixture(scope="module")
def desk_data():
    scene = D.SceneConfig()
    return D.gen_dataset(200, scene, seed=1), D.gen_dataset(20, scene, seed=2)


def _run(train_set, val, iters, seed=0, **overrides):
    cfg = TR.load_config(overrides={"max_iter": str(iters), "seed": str(seed),
                                    **{k: str(v) for k, v in overrides.items()}})
    state, _ = TR.train(cfg, train_set)
    return TR.evaluate_model(state.model, val).epe_all


@pytest.mark.slow
def test_4_trend_reproduction(desk_data):
    train_set, val = desk_data
    t0 = time.process_time()
    arms = {"rescorr": {"model.embed_semantics": "false", "weights.lambda_seg": 0},
            "segstereo_ps": {"weights.lambda_seg": 0},
            "segstereo_full": {}}
    epe = {a: [_run(train_set, val, 300, seed, **ov) for seed in range(5)] for a, ov in arms.items()}
    cpu = time.process_time() - t0
    mean = {a: float(np.mean(v)) for a, v in epe.items()}
    wins = int(sum(f < p for f, p in zip(epe["segstereo_full"], epe["segstereo_ps"])))
    a_ok = mean["segstereo_full"] <= mean["rescorr"]
    b_ok = mean["segstereo_full"] <= 1.05 * mean["segstereo_ps"] and wins >= 3
    ok = a_ok and b_ok and cpu <= 900
    per_seed = "; ".join(f"{a} " + ",".join(f"{e:.3f}" for e in v) for a, v in epe.items())
    report("4 trend reproduction", ok,
           f"mean EPE rescorr {mean['rescorr']:.3f} / segstereo p+s {mean['segstereo_ps']:.3f} / "
           f"+seg {mean['segstereo_full']:.3f}; seg loss helps on {wins}/5 seeds; {cpu:.0f}s CPU [{per_seed}]")
    assert ok, epe


@pytest.mark.slow
def test_5_convergence(desk_data):
    train_set, val = desk_data
    init = TR.evaluate_model(M.build(M.ModelConfig(), seed=0), val).epe_all
    t0 = time.process_time()
    unsup = _run(train_set, val, 300, mode="unsupervised")
    t_unsup = time.process_time() - t0
    t0 = time.process_time()
    sup = _run(train_set, val, 500, mode="supervised")
    t_sup = time.process_time() - t0
    ok = unsup <= 0.5 * init and sup < 1.0 and max(t_unsup, t_sup) <= 600
    report("5 convergence", ok,
           f"unsupervised 300 it: {init:.3f} -> {unsup:.3f} px ({100 * unsup / init:.0f}%, {t_unsup:.0f}s); "
           f"supervised 500 it: {sup:.3f} px ({t_sup:.0f}s)")
    assert ok


def test_6_formats(tmp_path, desk_data):
    rng = np.random.default_rng(6)
    d = rng.uniform(0.004, 255.99, size=(32, 48))
    D.write_kitti_disparity(tmp_path / "d.png", d)
    back, valid = D.read_kitti_disparity(tmp_path / "d.png")
    kitti_err = float(np.max(np.abs(back - d)))

    pfm = rng.normal(scale=50, size=(17, 23)).astype(np.float32)
    D.write_pfm(tmp_path / "d.pfm", pfm)
    pfm_exact = D.read_pfm(tmp_path / "d.pfm")[0].tobytes() == pfm.tobytes()

    train_set = desk_data[0][:20]
    cfg = TR.load_config(overrides={"max_iter": "40", "checkpoint_every": "20", "seg_pretrain_iters": "20"})
    full, _ = TR.train(cfg, train_set, tmp_path / "full")
    TR.train(cfg, train_set, tmp_path / "half", stop_after=20)
    resumed, _ = TR.train(cfg, train_set, tmp_path / "resumed", resume=str(tmp_path / "half" / "ckpt_000020.ssm"))
    resume_exact = (tmp_path / "full" / "final.ssm").read_bytes() == (tmp_path / "resumed" / "final.ssm").read_bytes()
    ok = kitti_err <= 1 / 512 and valid.all() and pfm_exact and resume_exact
    report("6 formats", ok, f"KITTI max err {kitti_err:.5f} px (<= {1 / 512:.5f}); PFM bit-exact {pfm_exact}; "
                            f"resume 20+20 == 40 byte-exact {resume_exact}")
    assert ok


def test_7_shape_contracts():
    state = M.build(M.ModelConfig(), seed=0)
    shapes = [(8, 8), (16, 24), (24, 40), (64, 128)]
    ok = state.config.cost_channels == 25
    for h, w in shapes:
        rng = np.random.default_rng(h * w)
        out = M.forward(state, rng.uniform(0, 255, (1, 3, h, w)), rng.uniform(0, 255, (1, 3, h, w)))
        ok &= out.disparity.shape == (1, 1, h, w) and out.cost_volume.shape[1] == 25
    report("7 shape contracts", ok, f"25 cost channels; full-resolution output for {shapes}")
    assert ok


def test_8_metric_correctness():
    good = metrics.d1(np.array([104.0]), np.array([100.0])) == 0.0
    bad = metrics.d1(np.array([14.0]), np.array([10.0])) == 100.0
    mid = TR.poly_lr(1000, 0.01, 0.9, 2000)
    ok = good and bad and abs(mid - 0.005359) <= 1e-6
    report("8 metric correctness", ok, f"gt100/err4 good {good}; gt10/err4 bad {bad}; poly_lr midpoint {mid:.6f}")
    assert ok
